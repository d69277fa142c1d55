//! Tab-separated per-step loss log.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing a
//! row gives back the exact values that were logged.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::schedule::Phase;

pub const LEAD_COLUMNS: [&str; 6] = ["step", "images", "stage", "resolution", "phase", "alpha"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Combined images seen after this step.
    pub global_images_seen: u64,
    pub stage: usize,
    pub resolution: usize,
    pub phase: Phase,
    pub alpha: f32,
    pub report: LossReport,
}

pub fn header() -> String {
    LEAD_COLUMNS
        .iter()
        .chain(LossReport::COLUMNS.iter())
        .copied()
        .collect::<Vec<_>>()
        .join("\t")
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        let mut fields = vec![
            self.step.to_string(),
            self.global_images_seen.to_string(),
            self.stage.to_string(),
            self.resolution.to_string(),
            self.phase.as_str().to_string(),
            self.alpha.to_string(),
        ];
        fields.extend(self.report.values().iter().map(f64::to_string));
        fields.join("\t")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed metrics row `{line}`"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != LEAD_COLUMNS.len() + LossReport::COLUMNS.len() {
            return Err(bad());
        }
        let phase = match f[4] {
            "growing" => Phase::Growing,
            "reinforcement" => Phase::Reinforcement,
            _ => return Err(bad()),
        };
        let mut values = [0f64; 12];
        for (v, s) in values.iter_mut().zip(&f[6..]) {
            *v = s.parse().map_err(|_| bad())?;
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            global_images_seen: f[1].parse().map_err(|_| bad())?,
            stage: f[2].parse().map_err(|_| bad())?,
            resolution: f[3].parse().map_err(|_| bad())?,
            phase,
            alpha: f[5].parse().map_err(|_| bad())?,
            report: LossReport::from_values(values),
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header() => {}
        _ => return Err(Error::Config(format!("{} has no metrics header", path.display()))),
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Opens `path` for appending. Rows with `step >= keep_before` left over from an
    /// interrupted run are dropped first, so a resumed run does not log a step twice.
    pub fn open(path: &Path, keep_before: u64) -> Result<Self> {
        if path.exists() {
            let rows = read_metrics(path)?;
            if rows.iter().any(|r| r.step >= keep_before) {
                let mut text = header() + "\n";
                for r in rows.iter().filter(|r| r.step < keep_before) {
                    text.push_str(&r.to_line());
                    text.push('\n');
                }
                fs::write(path, text)?;
            }
        } else {
            fs::write(path, header() + "\n")?;
        }
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(step: u64, v: [f64; 12]) -> MetricsRow {
        MetricsRow {
            step,
            global_images_seen: step * 16,
            stage: 1,
            resolution: 8,
            phase: Phase::Growing,
            alpha: 0.1 + step as f32 * 1e-3,
            report: LossReport::from_values(v),
        }
    }

    proptest! {
        #[test]
        fn rows_roundtrip_exactly(step in 0u64..1_000_000, v in proptest::array::uniform12(-1e6f64..1e6)) {
            let r = row(step, v);
            prop_assert_eq!(MetricsRow::parse(&r.to_line()).unwrap(), r);
        }
    }

    #[test]
    fn reopen_drops_rows_from_the_future() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        {
            let mut log = MetricsLog::open(&p, 0).unwrap();
            for s in 0..5 {
                log.append(&row(s, [s as f64 / 3.0; 12])).unwrap();
            }
        }
        {
            let mut log = MetricsLog::open(&p, 3).unwrap();
            log.append(&row(3, [7.0; 12])).unwrap();
        }
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(rows[3].report.cyc, 7.0);
        assert_eq!(rows[1].report.cyc, 1.0 / 3.0);
    }
}
