//! CSV emission. All files are RFC-4180 with a header row, UTF-8, and carry
//! a `schema_version` column; floats are written in Rust's shortest
//! round-trip form so equal values produce equal bytes. Writes are atomic
//! (temp file, then rename). Wall-clock columns (`seconds`, `time_pe_s`) are
//! the only fields that vary between identically-seeded runs.

use std::path::Path;

use sbfm_core::attack::AttackReport;
use sbfm_core::model::TrainReport;

use crate::CliError;

pub const SCHEMA_VERSION: &str = "1";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::run(format!("cannot create {}: {e}", parent.display())))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::run(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::run(format!("cannot move into place {}: {e}", path.display())))?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn csv_error(e: impl std::fmt::Display) -> CliError {
    CliError::run(format!("csv error: {e}"))
}

fn into_bytes(writer: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, CliError> {
    writer.into_inner().map_err(csv_error)
}

/// `train_metrics_seed<S>.csv`: one row per epoch.
pub fn write_train_metrics(path: &Path, seed: u64, report: &TrainReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "schema_version",
        "seed",
        "epoch",
        "train_loss",
        "train_acc",
        "val_acc",
        "seconds",
    ])
    .map_err(csv_error)?;
    for (epoch, stats) in report.epoch_stats.iter().enumerate() {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            seed.to_string(),
            epoch.to_string(),
            fmt(stats.train_loss),
            fmt(stats.train_acc),
            fmt(stats.val_acc),
            format!("{:.3}", stats.seconds),
        ])
        .map_err(csv_error)?;
    }
    write_atomic(path, &into_bytes(w)?)
}

/// One summary line per trained seed.
pub struct SummaryRow {
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub time_per_epoch: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `train_summary.csv`: per-seed rows plus one aggregate row (mean over
/// seeds, with sample standard deviations in the `*_std` columns).
pub fn write_train_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "schema_version",
        "seed",
        "tr_acc",
        "te_acc",
        "time_pe_s",
        "tr_acc_std",
        "te_acc_std",
        "time_pe_s_std",
    ])
    .map_err(csv_error)?;
    for row in rows {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            row.seed.to_string(),
            fmt(row.train_acc),
            fmt(row.test_acc),
            format!("{:.3}", row.time_per_epoch),
            String::new(),
            String::new(),
            String::new(),
        ])
        .map_err(csv_error)?;
    }
    let (tr_m, tr_s) = mean_std(&rows.iter().map(|r| r.train_acc).collect::<Vec<_>>());
    let (te_m, te_s) = mean_std(&rows.iter().map(|r| r.test_acc).collect::<Vec<_>>());
    let (tp_m, tp_s) = mean_std(&rows.iter().map(|r| r.time_per_epoch).collect::<Vec<_>>());
    w.write_record([
        SCHEMA_VERSION.to_string(),
        "mean".to_string(),
        fmt(tr_m),
        fmt(te_m),
        format!("{tp_m:.3}"),
        fmt(tr_s),
        fmt(te_s),
        format!("{tp_s:.3}"),
    ])
    .map_err(csv_error)?;
    write_atomic(path, &into_bytes(w)?)
}

/// `attack.csv`: one row per (model, epsilon).
pub fn write_attack_csv(path: &Path, report: &AttackReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["schema_version", "model", "epsilon", "accuracy", "n"])
        .map_err(csv_error)?;
    for rec in &report.records {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            rec.model_id.clone(),
            fmt(rec.epsilon),
            fmt(rec.accuracy),
            rec.samples.to_string(),
        ])
        .map_err(csv_error)?;
    }
    write_atomic(path, &into_bytes(w)?)
}

/// One sweep cell, aggregated over seeds.
pub struct SweepRow {
    pub l: usize,
    pub t: f64,
    pub status: SweepStatus,
}

pub enum SweepStatus {
    Ok {
        adv_acc: f64,
        train_acc: f64,
        test_acc: f64,
        time_per_epoch: f64,
    },
    Failed(String),
}

/// `sweep.csv`: one row per `(l, t)` cell; failed cells are marked FAILED and
/// leave their metric columns empty.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "schema_version",
        "l",
        "t",
        "adv_acc",
        "tr_acc",
        "te_acc",
        "time_pe_s",
        "status",
    ])
    .map_err(csv_error)?;
    for row in rows {
        match &row.status {
            SweepStatus::Ok {
                adv_acc,
                train_acc,
                test_acc,
                time_per_epoch,
            } => w.write_record([
                SCHEMA_VERSION.to_string(),
                row.l.to_string(),
                fmt(row.t),
                fmt(*adv_acc),
                fmt(*train_acc),
                fmt(*test_acc),
                format!("{time_per_epoch:.3}"),
                "ok".to_string(),
            ]),
            SweepStatus::Failed(reason) => w.write_record([
                SCHEMA_VERSION.to_string(),
                row.l.to_string(),
                fmt(row.t),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                format!("FAILED: {reason}"),
            ]),
        }
        .map_err(csv_error)?;
    }
    write_atomic(path, &into_bytes(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[2.0, 4.0, 6.0]);
        assert_eq!(m, 4.0);
        assert!((s - 2.0).abs() < 1e-12);
        let (m, s) = mean_std(&[5.0]);
        assert_eq!((m, s), (5.0, 0.0));
    }

    #[test]
    fn summary_row_count_is_seeds_plus_one() {
        let dir = std::env::temp_dir().join(format!("sbfm-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train_summary.csv");
        let rows: Vec<SummaryRow> = (1..=3)
            .map(|s| SummaryRow {
                seed: s,
                train_acc: 0.9,
                test_acc: 0.8,
                time_per_epoch: 1.5,
            })
            .collect();
        write_train_summary(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1, "header + seeds + aggregate");
        assert!(lines[4].contains("mean"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
