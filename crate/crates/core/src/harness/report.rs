//! Learning curves and final scores collected from run directories.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsLog;
use crate::harness::METRICS_FILE;

pub const CURVES_FILE: &str = "curves.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub run: String,
    pub env_step: u64,
    pub median_normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub curves: Vec<CurvePoint>,
    /// `(run, final median)`, best first.
    pub finals: Vec<(String, f64)>,
    /// One line per run directory that was skipped.
    pub warnings: Vec<String>,
}

/// Trailing moving average over at most `window` points.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let slice = &xs[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Reads `metrics.csv` from every directory. Unreadable or malformed logs
/// are reported as warnings and left out.
pub fn build(run_dirs: &[PathBuf], window: usize) -> Result<Report> {
    if window == 0 {
        return Err(Error::Usage("smoothing window must be at least 1".into()));
    }
    let mut curves = Vec::new();
    let mut finals = Vec::new();
    let mut warnings = Vec::new();
    for dir in run_dirs {
        let run = dir.display().to_string();
        let log = match MetricsLog::read(&dir.join(METRICS_FILE)) {
            Ok(log) if log.rows.is_empty() => {
                warnings.push(format!("{run}: metrics log has no rows; skipped"));
                continue;
            }
            Ok(log) => log,
            Err(e) => {
                warnings.push(format!("{run}: {e}; skipped"));
                continue;
            }
        };
        let raw: Vec<f64> = log.rows.iter().map(|r| r.median_normalized).collect();
        let smooth = moving_average(&raw, window);
        for (r, m) in log.rows.iter().zip(&smooth) {
            curves.push(CurvePoint { run: run.clone(), env_step: r.env_step, median_normalized: *m });
        }
        finals.push((run, *smooth.last().expect("non-empty")));
    }
    if finals.is_empty() {
        return Err(Error::Usage("no readable metrics logs among the given directories".into()));
    }
    finals.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(Report { curves, finals, warnings })
}

impl Report {
    pub fn curves_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["run", "env_step", "median_normalized"])?;
        for p in &self.curves {
            w.write_record([p.run.clone(), p.env_step.to_string(), p.median_normalized.to_string()])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_curves(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.curves_csv()?)?;
        Ok(())
    }

    /// Plain-text table of final medians.
    pub fn table(&self) -> String {
        let width = self.finals.iter().map(|(r, _)| r.len()).max().unwrap_or(3).max(3);
        let mut out = format!("{:<width$}  final_median\n", "run");
        for (run, m) in &self.finals {
            out.push_str(&format!("{run:<width$}  {m:>12.2}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::MetricsRow;

    fn write_log(dir: &Path, medians: &[f64]) {
        std::fs::create_dir_all(dir).unwrap();
        let log = MetricsLog {
            envs: vec!["chain(3)".into()],
            rows: medians
                .iter()
                .enumerate()
                .map(|(i, &m)| MetricsRow {
                    env_step: 10 * i as u64,
                    learn_steps: i as u64,
                    batch_mean_loss: 0.5,
                    median_normalized: m,
                    returns: vec![m / 100.0],
                    normalized: vec![m],
                })
                .collect(),
        };
        log.write(&dir.join(METRICS_FILE)).unwrap();
    }

    #[test]
    fn smoothing_fixes_constants_and_window_one_is_identity() {
        assert_eq!(moving_average(&[3.0; 7], 5), vec![3.0; 7]);
        let xs = [1.0, 5.0, 2.0];
        assert_eq!(moving_average(&xs, 1), xs.to_vec());
        assert_eq!(moving_average(&[0.0, 2.0, 4.0, 6.0], 2), vec![0.0, 1.0, 3.0, 5.0]);
    }

    #[test]
    fn report_sorts_and_warns() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let bad = tmp.path().join("bad");
        write_log(&a, &[0.0, 20.0, 40.0]);
        write_log(&b, &[0.0, 90.0, 100.0]);
        std::fs::create_dir_all(&bad).unwrap();
        std::fs::write(bad.join(METRICS_FILE), "env_step,learn_steps\n1,2,3\n").unwrap();
        let r = build(&[a.clone(), b.clone(), bad], 1).unwrap();
        assert_eq!(r.finals.iter().map(|f| f.1).collect::<Vec<_>>(), vec![100.0, 40.0]);
        assert_eq!(r.warnings.len(), 1);
        let single = build(&[a], 1).unwrap();
        let meds: Vec<f64> = single.curves.iter().map(|p| p.median_normalized).collect();
        assert_eq!(meds, vec![0.0, 20.0, 40.0]);
        assert!(r.table().lines().nth(1).unwrap().contains("100.00"));
    }
}
