//! Report files: comma-separated text plus a machine-readable JSON twin.
//!
//! Both carry the master seed and config digest. CSV files start with
//! `# seed=` / `# config_digest=` comment lines followed by a header row
//! naming the columns; values use six decimal places. The JSON twin holds
//! the same rows as an array of objects.

use crate::error::Result;
use crate::eval::{AttackMetrics, DetectionMetrics, SweepRow};
use serde_json::{json, Map, Value};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Provenance stamped into every report.
#[derive(Debug, Clone)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_digest: String,
}

fn open(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_preamble(w: &mut impl Write, meta: &ReportMeta) -> Result<()> {
    writeln!(w, "# seed={}", meta.seed)?;
    writeln!(w, "# config_digest={}", meta.config_digest)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut w = open(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_attack_report(
    csv_path: &Path,
    json_path: &Path,
    meta: &ReportMeta,
    metrics: &AttackMetrics,
) -> Result<()> {
    let mut w = open(csv_path)?;
    write_preamble(&mut w, meta)?;
    writeln!(w, "ma,asr")?;
    writeln!(w, "{:.6},{:.6}", metrics.ma, metrics.asr)?;
    w.flush()?;
    write_json(
        json_path,
        &json!({
            "seed": meta.seed,
            "config_digest": meta.config_digest,
            "ma": metrics.ma,
            "asr": metrics.asr,
        }),
    )
}

pub fn write_detection_report(
    csv_path: &Path,
    json_path: &Path,
    meta: &ReportMeta,
    metrics: &DetectionMetrics,
) -> Result<()> {
    let mut w = open(csv_path)?;
    write_preamble(&mut w, meta)?;
    writeln!(
        w,
        "tpr,fpr,true_positives,total_poisoned,false_positives,total_benign"
    )?;
    writeln!(
        w,
        "{:.6},{:.6},{},{},{},{}",
        metrics.tpr,
        metrics.fpr,
        metrics.true_positives,
        metrics.total_poisoned,
        metrics.false_positives,
        metrics.total_benign
    )?;
    w.flush()?;
    write_json(
        json_path,
        &json!({
            "seed": meta.seed,
            "config_digest": meta.config_digest,
            "tpr": metrics.tpr,
            "fpr": metrics.fpr,
            "true_positives": metrics.true_positives,
            "total_poisoned": metrics.total_poisoned,
            "false_positives": metrics.false_positives,
            "total_benign": metrics.total_benign,
        }),
    )
}

/// Writes a sweep as CSV plus JSON twin. The header names the swept
/// parameter; grouped rows (metric comparison) gain a leading `metric`
/// column, and MA/ASR columns appear when the sweep measured them.
pub fn write_sweep_report(
    csv_path: &Path,
    json_path: &Path,
    meta: &ReportMeta,
    param_name: &str,
    rows: &[SweepRow],
) -> Result<()> {
    let grouped = rows.first().is_some_and(|r| r.group.is_some());
    let with_attack = rows.first().is_some_and(|r| r.ma.is_some());
    let mut w = open(csv_path)?;
    write_preamble(&mut w, meta)?;
    let mut header = Vec::new();
    if grouped {
        header.push("metric");
    }
    header.push(param_name);
    if with_attack {
        header.push("ma");
        header.push("asr");
    }
    header.push("tpr");
    header.push("fpr");
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let mut fields = Vec::new();
        if grouped {
            fields.push(row.group.clone().unwrap_or_default());
        }
        fields.push(row.label.clone());
        if with_attack {
            fields.push(format!("{:.6}", row.ma.unwrap_or(f64::NAN)));
            fields.push(format!("{:.6}", row.asr.unwrap_or(f64::NAN)));
        }
        fields.push(format!("{:.6}", row.tpr));
        fields.push(format!("{:.6}", row.fpr));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;

    let json_rows: Vec<Value> = rows
        .iter()
        .map(|row| {
            let mut obj = Map::new();
            if let Some(g) = &row.group {
                obj.insert("metric".into(), json!(g));
            }
            obj.insert(param_name.into(), json!(row.label));
            if let Some(ma) = row.ma {
                obj.insert("ma".into(), json!(ma));
            }
            if let Some(asr) = row.asr {
                obj.insert("asr".into(), json!(asr));
            }
            obj.insert("tpr".into(), json!(row.tpr));
            obj.insert("fpr".into(), json!(row.fpr));
            Value::Object(obj)
        })
        .collect();
    write_json(
        json_path,
        &json!({
            "seed": meta.seed,
            "config_digest": meta.config_digest,
            "swept": param_name,
            "rows": json_rows,
        }),
    )
}
