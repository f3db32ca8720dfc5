//! Metrics persistence: append-only line-delimited records, a parallel
//! timings file, and the summary table.
//!
//! Records hold only deterministic quantities, so rerunning a configuration
//! reproduces the metrics files byte for byte. Wall-clock durations go to a
//! separate timings file that makes no such promise.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stage label for a cycle snapshot record.
pub fn cycle_stage(k: usize) -> String {
    format!("cycle-{k}")
}

fn stage_is_valid(stage: &str) -> bool {
    matches!(stage, "baseline" | "ensemble" | "distill")
        || stage
            .strip_prefix("cycle-")
            .is_some_and(|k| !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()))
}

/// One completed stage of one arm of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    pub seed: u64,
    pub arm: String,
    pub stage: String,
    pub param_count: u64,
    pub mac_count: u64,
    pub train_loss: Vec<f64>,
    pub eval_accuracy: f64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !stage_is_valid(&self.stage) {
            return Err(Error::Param(format!("unknown stage name {:?}", self.stage)));
        }
        if !(0.0..=1.0).contains(&self.eval_accuracy) {
            return Err(Error::Param(format!(
                "accuracy {} outside [0,1] in stage {}",
                self.eval_accuracy, self.stage
            )));
        }
        Ok(())
    }
}

/// One line of a metrics file: a completed stage or a recorded failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricsLine {
    Metrics(MetricsRecord),
    Failure { run: String, seed: u64, arm: String, stage: String, error: String },
}

/// Wall-clock seconds of one stage; lives outside the metrics files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub run: String,
    pub seed: u64,
    pub arm: String,
    pub stage: String,
    pub wall_seconds: f64,
}

/// Line-by-line writer; every record is flushed whole, so a crashed run
/// leaves a file parseable up to its last complete line.
pub struct LineWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LineWriter {
    /// Starts a fresh file, truncating any previous run's.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(LineWriter { out: BufWriter::new(File::create(&path)?), path })
    }

    /// Opens for appending, keeping existing lines.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = File::options().create(true).append(true).open(&path)?;
        Ok(LineWriter { out: BufWriter::new(file), path })
    }

    pub fn write<T: Serialize>(&mut self, line: &T) -> Result<()> {
        let json = serde_json::to_string(line)
            .map_err(|e| Error::Run(format!("cannot serialize a record: {e}")))?;
        self.out.write_all(json.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parses a metrics file. A malformed final line (a crash mid-write) is
/// dropped; a malformed earlier line is an error.
pub fn read_metrics_lines(path: impl AsRef<Path>) -> Result<Vec<MetricsLine>> {
    let mut text = String::new();
    File::open(&path)?.read_to_string(&mut text)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<MetricsLine>(line) {
            Ok(parsed) => {
                if let MetricsLine::Metrics(r) = &parsed {
                    r.validate()?;
                }
                out.push(parsed);
            }
            Err(e) if i + 1 == lines.len() => {
                let _ = e;
                break;
            }
            Err(e) => {
                return Err(Error::Format {
                    offset: i as u64,
                    message: format!(
                        "bad record on line {} of {}: {e}",
                        i + 1,
                        path.as_ref().display()
                    ),
                })
            }
        }
    }
    Ok(out)
}

// ─── summary ───

/// Mean and sample standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub param_count: f64,
    pub mac_count: f64,
    /// 100 * (1 - mac / baseline mac).
    pub pct_macs_down: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub n: usize,
}

fn row_from(method: &str, records: &[&MetricsRecord], baseline_mac: f64) -> Option<SummaryRow> {
    if records.is_empty() {
        return None;
    }
    let accs: Vec<f64> = records.iter().map(|r| r.eval_accuracy).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let param_count =
        records.iter().map(|r| r.param_count as f64).sum::<f64>() / records.len() as f64;
    let mac_count = records.iter().map(|r| r.mac_count as f64).sum::<f64>() / records.len() as f64;
    let pct_macs_down =
        if baseline_mac > 0.0 { 100.0 * (1.0 - mac_count / baseline_mac) } else { 0.0 };
    Some(SummaryRow {
        method: method.into(),
        param_count,
        mac_count,
        pct_macs_down,
        accuracy_mean,
        accuracy_std,
        n: records.len(),
    })
}

/// Builds the final comparison table from raw records. Cycle arms report
/// their last-cycle snapshot; with zero cycles they fall back to the
/// baseline rows. Methods appear in a fixed order, absent ones skipped.
pub fn compute_summary(records: &[MetricsRecord], num_cycles: usize) -> Vec<SummaryRow> {
    let select = |arm: &str, stage: &str| -> Vec<&MetricsRecord> {
        records.iter().filter(|r| r.arm == arm && r.stage == stage).collect()
    };
    let baseline = select("baseline", "baseline");
    let baseline_mac = if baseline.is_empty() {
        0.0
    } else {
        baseline.iter().map(|r| r.mac_count as f64).sum::<f64>() / baseline.len() as f64
    };
    let last = cycle_stage(num_cycles);
    let mut rows = Vec::new();
    let mut push = |method: &str, records: Vec<&MetricsRecord>| {
        if let Some(row) = row_from(method, &records, baseline_mac) {
            rows.push(row);
        }
    };
    push("baseline", baseline);
    for arm in ["fixed_lr", "one_cycle"] {
        let recs =
            if num_cycles == 0 { select("baseline", "baseline") } else { select(arm, &last) };
        push(arm, recs);
    }
    push("ensemble", select("ensemble_distill", "ensemble"));
    push("ensemble_distill", select("ensemble_distill", "distill"));
    push("single_distill", select("single_distill", "distill"));
    rows
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out =
        String::from("method\tparams\tmacs\tpct_macs_down\taccuracy_mean\taccuracy_std\tn\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.0}\t{:.0}\t{:.2}\t{:.4}\t{:.4}\t{}\n",
            r.method,
            r.param_count,
            r.mac_count,
            r.pct_macs_down,
            r.accuracy_mean,
            r.accuracy_std,
            r.n
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(arm: &str, stage: &str, acc: f64, macs: u64) -> MetricsRecord {
        MetricsRecord {
            run: "t-seed1".into(),
            seed: 1,
            arm: arm.into(),
            stage: stage.into(),
            param_count: 100,
            mac_count: macs,
            train_loss: vec![1.0, 0.5],
            eval_accuracy: acc,
        }
    }

    #[test]
    fn stage_names_follow_the_fixed_shapes() {
        for good in ["baseline", "ensemble", "distill", "cycle-1", "cycle-12"] {
            assert!(stage_is_valid(good), "{good}");
        }
        for bad in ["cycle-", "cycle-x", "warmup", "Baseline", "cycle-1x"] {
            assert!(!stage_is_valid(bad), "{bad}");
        }
    }

    #[test]
    fn accuracy_outside_unit_interval_is_rejected() {
        let mut r = record("baseline", "baseline", 0.5, 10);
        r.validate().unwrap();
        r.eval_accuracy = 1.5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn lines_roundtrip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let lines = vec![
            MetricsLine::Metrics(record("baseline", "baseline", 0.9, 10)),
            MetricsLine::Failure {
                run: "t-seed1".into(),
                seed: 1,
                arm: "fixed_lr".into(),
                stage: "cycle-1".into(),
                error: "loss diverged".into(),
            },
        ];
        let mut w = LineWriter::create(&path).unwrap();
        for l in &lines {
            w.write(l).unwrap();
        }
        assert_eq!(read_metrics_lines(&path).unwrap(), lines);
    }

    #[test]
    fn truncated_final_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = LineWriter::create(&path).unwrap();
        let r = MetricsLine::Metrics(record("baseline", "baseline", 0.9, 10));
        w.write(&r).unwrap();
        drop(w);
        let mut f = File::options().append(true).open(&path).unwrap();
        f.write_all(b"{\"type\":\"metrics\",\"run\":\"t").unwrap();
        drop(f);
        assert_eq!(read_metrics_lines(&path).unwrap(), vec![r]);
    }

    #[test]
    fn malformed_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "not json\n{\"also\": \"not a record\"}\n").unwrap();
        assert!(matches!(read_metrics_lines(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn append_keeps_existing_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let a = MetricsLine::Metrics(record("baseline", "baseline", 0.9, 10));
        let b = MetricsLine::Metrics(record("fixed_lr", "cycle-1", 0.8, 8));
        LineWriter::create(&path).unwrap().write(&a).unwrap();
        LineWriter::append(&path).unwrap().write(&b).unwrap();
        assert_eq!(read_metrics_lines(&path).unwrap(), vec![a.clone(), b]);
        LineWriter::create(&path).unwrap().write(&a).unwrap();
        assert_eq!(read_metrics_lines(&path).unwrap().len(), 1);
    }

    #[test]
    fn mean_std_matches_hand_arithmetic() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
        let (m, s) = mean_std(&[0.7]);
        assert_eq!((m, s), (0.7, 0.0));
    }

    #[test]
    fn summary_selects_final_cycles_and_computes_mac_reduction() {
        let mut records = vec![
            record("baseline", "baseline", 0.90, 1000),
            record("fixed_lr", "cycle-1", 0.80, 800),
            record("fixed_lr", "cycle-2", 0.85, 600),
            record("one_cycle", "cycle-1", 0.82, 800),
            record("one_cycle", "cycle-2", 0.88, 600),
            record("ensemble_distill", "ensemble", 0.92, 2200),
            record("ensemble_distill", "distill", 0.89, 600),
        ];
        let mut second = records.clone();
        for r in &mut second {
            r.seed = 2;
            r.eval_accuracy += 0.01;
        }
        records.extend(second);
        let rows = compute_summary(&records, 2);
        let by_name: std::collections::BTreeMap<&str, &SummaryRow> =
            rows.iter().map(|r| (r.method.as_str(), r)).collect();
        assert_eq!(rows.len(), 5);
        let fixed = by_name["fixed_lr"];
        assert_eq!(fixed.n, 2);
        assert!((fixed.accuracy_mean - 0.855).abs() < 1e-12);
        assert!((fixed.pct_macs_down - 40.0).abs() < 1e-9);
        assert!((by_name["baseline"].pct_macs_down).abs() < 1e-9);
        let expected_std = ((0.85f64 - 0.855).powi(2) * 2.0).sqrt();
        assert!((fixed.accuracy_std - expected_std).abs() < 1e-12);
    }

    #[test]
    fn zero_cycle_summary_reuses_the_baseline_for_both_arms() {
        let records = vec![record("baseline", "baseline", 0.9, 1000)];
        let rows = compute_summary(&records, 0);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| (r.accuracy_mean - 0.9).abs() < 1e-15));
        let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, vec!["baseline", "fixed_lr", "one_cycle"]);
    }

    #[test]
    fn rendered_summary_has_two_decimal_mac_column() {
        let records = vec![
            record("baseline", "baseline", 0.9, 3000),
            record("fixed_lr", "cycle-1", 0.8, 2000),
        ];
        let text = render_summary(&compute_summary(&records, 1));
        let line = text.lines().find(|l| l.starts_with("fixed_lr")).unwrap();
        assert!(line.contains("\t33.33\t"), "{line}");
    }
}
