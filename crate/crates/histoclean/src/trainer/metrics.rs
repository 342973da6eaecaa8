//! Step metrics and the append-only CSV log.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::losses::LossReport;

use super::TrainError;

/// Everything logged for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: LossReport,
    /// Seconds since the run started; written as 0 in deterministic mode so
    /// the log is a pure function of (config, data, seed).
    pub wall_clock_s: f64,
}

pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

fn header() -> String {
    let mut cols = vec!["epoch", "step", "lr"];
    cols.extend(LossReport::COLUMNS);
    cols.push("wall_clock_s");
    cols.join(",")
}

impl MetricsWriter {
    /// Opens (or continues) the metrics file, writing the header only when
    /// the file is empty.
    pub fn open(path: &Path) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        let fresh = file.metadata().map_err(io)?.len() == 0;
        let mut out = std::io::BufWriter::new(file);
        if fresh {
            writeln!(out, "{}", header()).map_err(io)?;
        }
        Ok(MetricsWriter { out })
    }

    /// Appends one row and flushes, so an interrupted run loses nothing.
    pub fn append(&mut self, m: &StepMetrics) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: "metrics.csv".into(),
            source,
        };
        let mut row = format!("{},{},{}", m.epoch, m.step, m.lr);
        for v in m.losses.values() {
            row.push(',');
            row.push_str(&format!("{v}"));
        }
        row.push(',');
        row.push_str(&format!("{}", m.wall_clock_s));
        writeln!(self.out, "{row}").map_err(io)?;
        self.out.flush().map_err(io)?;
        Ok(())
    }
}

/// Reads a metrics file back; absent components come back as zeros.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expect = 3 + LossReport::COLUMNS.len() + 1;
        if fields.len() != expect {
            return Err(TrainError::InvalidConfig(format!(
                "metrics row {i} has {} fields, expected {expect}",
                fields.len()
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| TrainError::InvalidConfig(format!("bad float `{s}` in metrics row {i}")))
        };
        let vals: Vec<f64> = fields[3..3 + 13]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<_, _>>()?;
        rows.push(StepMetrics {
            epoch: fields[0]
                .parse()
                .map_err(|_| TrainError::InvalidConfig("bad epoch".into()))?,
            step: fields[1]
                .parse()
                .map_err(|_| TrainError::InvalidConfig("bad step".into()))?,
            lr: parse(fields[2])?,
            losses: LossReport {
                g_adv_ab: Some(vals[0]),
                g_adv_ba: Some(vals[1]),
                cyc_aba: Some(vals[2]),
                cyc_bab: Some(vals[3]),
                id_a: Some(vals[4]),
                id_b: Some(vals[5]),
                d_a: Some(vals[6]),
                d_b: Some(vals[7]),
                cls: Some(vals[8]),
                smooth: Some(vals[9]),
                sparse: Some(vals[10]),
                total_g: Some(vals[11]),
                total_d: Some(vals[12]),
            },
            wall_clock_s: parse(fields[16])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_and_appending_continues_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let sample = StepMetrics {
            epoch: 2,
            step: 5,
            lr: 0.0009975,
            losses: LossReport {
                g_adv_ab: Some(1.25),
                g_adv_ba: Some(0.5),
                cyc_aba: Some(0.125),
                cyc_bab: Some(0.25),
                id_a: Some(0.0625),
                id_b: Some(0.03125),
                d_a: Some(0.75),
                d_b: Some(0.375),
                cls: None,
                smooth: None,
                sparse: None,
                total_g: Some(3.0),
                total_d: Some(1.125),
            },
            wall_clock_s: 0.0,
        };
        {
            let mut w = MetricsWriter::open(&path).unwrap();
            w.append(&sample).unwrap();
        }
        {
            let mut w = MetricsWriter::open(&path).unwrap();
            w.append(&sample).unwrap();
        }
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2, "append must not rewrite the header");
        assert_eq!(rows[0].lr, 0.0009975);
        assert_eq!(rows[0].losses.total_g, Some(3.0));
        // Absent components round-trip as zeros by design.
        assert_eq!(rows[0].losses.cls, Some(0.0));
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 1);
    }
}
