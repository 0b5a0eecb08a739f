//! Per-epoch, per-domain metrics records and their CSV emission.
//!
//! The CSV schema is fixed: one header row, reals at 9 significant digits,
//! LF newlines, no timestamps, so identical runs emit identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::util::fmt_g9;

pub const CSV_HEADER: &str = "run_id,seed,time_step,epoch,domain_id,accuracy,loss_total,\
loss_ce_pseudo,loss_ce_buffer,loss_swd_target,loss_swd_buffer,swd_current,swd_gmm_drift";

/// One evaluation row: a domain's test accuracy at a given epoch, together
/// with that epoch's loss components and bound diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub time_step: usize,
    /// Global epoch counter across the whole run (source epochs first).
    pub epoch: usize,
    pub domain_id: usize,
    pub accuracy: f64,
    pub loss_total: f64,
    pub loss_ce_pseudo: f64,
    pub loss_ce_buffer: f64,
    pub loss_swd_target: f64,
    pub loss_swd_buffer: f64,
    pub swd_current: f64,
    pub swd_gmm_drift: f64,
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.time_step,
            self.epoch,
            self.domain_id,
            fmt_g9(self.accuracy),
            fmt_g9(self.loss_total),
            fmt_g9(self.loss_ce_pseudo),
            fmt_g9(self.loss_ce_buffer),
            fmt_g9(self.loss_swd_target),
            fmt_g9(self.loss_swd_buffer),
            fmt_g9(self.swd_current),
            fmt_g9(self.swd_gmm_drift),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Invalid(format!(
                "accuracy {} outside [0, 1]",
                self.accuracy
            )));
        }
        let losses = [
            self.loss_total,
            self.loss_ce_pseudo,
            self.loss_ce_buffer,
            self.loss_swd_target,
            self.loss_swd_buffer,
            self.swd_current,
            self.swd_gmm_drift,
        ];
        if losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite loss component".into()));
        }
        Ok(())
    }
}

/// Streaming CSV writer used by the experiment loop so rows land on disk as
/// they are produced.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(CSV_HEADER.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        record.validate()?;
        self.out
            .write_all(record.to_csv_row().as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes a complete record list to `path` in the fixed schema.
pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut writer = MetricsWriter::create(path)?;
    for r in records {
        writer.append(r)?;
    }
    writer.finish()
}

/// Parses a metrics CSV produced by [`write_metrics_csv`]; test and
/// analysis helper.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("unexpected header {other:?}"),
            })
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (lineno + 2) as u64,
                message: format!("{} fields, expected 13", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                offset: (lineno + 2) as u64,
                message: format!("bad real {s:?}"),
            })
        };
        let parse_u = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                offset: (lineno + 2) as u64,
                message: format!("bad integer {s:?}"),
            })
        };
        records.push(MetricsRecord {
            run_id: fields[0].to_string(),
            seed: parse_u(fields[1])?,
            time_step: parse_u(fields[2])? as usize,
            epoch: parse_u(fields[3])? as usize,
            domain_id: parse_u(fields[4])? as usize,
            accuracy: parse_f(fields[5])?,
            loss_total: parse_f(fields[6])?,
            loss_ce_pseudo: parse_f(fields[7])?,
            loss_ce_buffer: parse_f(fields[8])?,
            loss_swd_target: parse_f(fields[9])?,
            loss_swd_buffer: parse_f(fields[10])?,
            swd_current: parse_f(fields[11])?,
            swd_gmm_drift: parse_f(fields[12])?,
        });
    }
    Ok(records)
}

/// One `curve_domain<id>.csv` per domain with (epoch, accuracy) rows, in
/// plot-ready form. No plotting backend ships with the crate, so a notice
/// replaces rendered images.
pub fn emit_learning_curves(records: &[MetricsRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Invalid("no records to plot".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let max_domain = records.iter().map(|r| r.domain_id).max().unwrap_or(0);
    let mut files = Vec::new();
    for id in 0..=max_domain {
        let path = out_dir.join(format!("curve_domain{id}.csv"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(b"epoch,accuracy\n")
            .map_err(|e| Error::io(&path, e))?;
        for r in records.iter().filter(|r| r.domain_id == id) {
            out.write_all(format!("{},{}\n", r.epoch, fmt_g9(r.accuracy)).as_bytes())
                .map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    eprintln!(
        "note: no plotting backend available; wrote {} curve data files to {}",
        files.len(),
        out_dir.display()
    );
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, domain_id: usize) -> MetricsRecord {
        MetricsRecord {
            run_id: "t".into(),
            seed: 1,
            time_step: 0,
            epoch,
            domain_id,
            accuracy: 0.123456789123,
            loss_total: 1.0 / 3.0,
            loss_ce_pseudo: 0.25,
            loss_ce_buffer: 0.0,
            loss_swd_target: 1234.56789012345,
            loss_swd_buffer: 0.0,
            swd_current: 1e-9,
            swd_gmm_drift: 0.0,
        }
    }

    #[test]
    fn empty_record_list_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn one_record_writes_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[record(0, 0)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn csv_round_trip_preserves_nine_significant_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let original = vec![record(0, 0), record(1, 1)];
        write_metrics_csv(&original, &path).unwrap();
        let parsed = read_metrics_csv(&path).unwrap();
        assert_eq!(parsed.len(), 2);
        for (a, b) in original.iter().zip(&parsed) {
            for (x, y) in [
                (a.accuracy, b.accuracy),
                (a.loss_total, b.loss_total),
                (a.loss_swd_target, b.loss_swd_target),
                (a.swd_current, b.swd_current),
            ] {
                assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-300), "{x} vs {y}");
            }
            assert_eq!(a.epoch, b.epoch);
        }
    }

    #[test]
    fn curves_one_file_per_domain_with_increasing_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            record(0, 0),
            record(1, 0),
            record(5, 0),
            record(5, 1),
            record(6, 1),
            record(6, 2),
        ];
        let files = emit_learning_curves(&records, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for (id, path) in files.iter().enumerate() {
            let text = std::fs::read_to_string(path).unwrap();
            let epochs: Vec<usize> = text
                .lines()
                .skip(1)
                .map(|l| l.split(',').next().unwrap().parse().unwrap())
                .collect();
            assert!(!epochs.is_empty());
            assert!(epochs.windows(2).all(|w| w[0] < w[1]), "domain {id}");
        }
        // the later domain's series starts at its first adaptation epoch
        let d2 = std::fs::read_to_string(&files[2]).unwrap();
        assert!(d2.lines().nth(1).unwrap().starts_with("6,"));
    }

    #[test]
    fn writer_rejects_out_of_range_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = record(0, 0);
        r.accuracy = 1.5;
        assert!(write_metrics_csv(&[r], &dir.path().join("m.csv")).is_err());
    }
}
