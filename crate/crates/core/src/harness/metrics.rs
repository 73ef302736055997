//! The evaluation log and its CSV form.
//!
//! Columns, in order: `env_step`, `learn_steps`, `batch_mean_loss`,
//! `median_normalized`, then `return.<env>` and `normalized.<env>` for
//! each environment. Floats use Rust's shortest round-trip formatting, so
//! reading a file back loses nothing.

use std::path::Path;

use crate::agent::{median, EvalPoint};
use crate::error::{Error, Result};

/// One evaluation across the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub env_step: u64,
    pub learn_steps: u64,
    pub batch_mean_loss: f64,
    pub median_normalized: f64,
    pub returns: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub envs: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

const FIXED: [&str; 4] = ["env_step", "learn_steps", "batch_mean_loss", "median_normalized"];

impl MetricsLog {
    /// Merges per-environment logs that share one evaluation schedule.
    pub fn merge(envs: Vec<String>, logs: &[&[EvalPoint]]) -> Result<Self> {
        let len = logs.first().map_or(0, |l| l.len());
        if logs.iter().any(|l| l.len() != len) {
            return Err(Error::Usage("environment logs have different lengths".into()));
        }
        let mut rows = Vec::with_capacity(len);
        for i in 0..len {
            let points: Vec<&EvalPoint> = logs.iter().map(|l| &l[i]).collect();
            let env_step = points[0].env_step;
            if points.iter().any(|p| p.env_step != env_step) {
                return Err(Error::Usage("environment logs are out of step".into()));
            }
            let losses: Vec<f64> = points.iter().map(|p| p.batch_mean_loss).filter(|l| !l.is_nan()).collect();
            let normalized: Vec<f64> = points.iter().map(|p| p.normalized).collect();
            rows.push(MetricsRow {
                env_step,
                learn_steps: points.iter().map(|p| p.learn_steps).sum(),
                batch_mean_loss: if losses.is_empty() {
                    f64::NAN
                } else {
                    losses.iter().sum::<f64>() / losses.len() as f64
                },
                median_normalized: median(&normalized),
                returns: points.iter().map(|p| p.mean_return).collect(),
                normalized,
            });
        }
        Ok(Self { envs, rows })
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
        for e in &self.envs {
            h.push(format!("return.{e}"));
            h.push(format!("normalized.{e}"));
        }
        h
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.env_step.to_string(),
                r.learn_steps.to_string(),
                r.batch_mean_loss.to_string(),
                r.median_normalized.to_string(),
            ];
            for (ret, norm) in r.returns.iter().zip(&r.normalized) {
                rec.push(ret.to_string());
                rec.push(norm.to_string());
            }
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Parses and checks a metrics CSV: schema, row widths and strictly
    /// increasing `env_step`.
    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.len() < FIXED.len() + 2 || header[..FIXED.len()] != FIXED || (header.len() - FIXED.len()) % 2 != 0 {
            return Err(Error::Usage(format!("unexpected metrics header: {}", header.join(","))));
        }
        let mut envs = Vec::new();
        for pair in header[FIXED.len()..].chunks(2) {
            let env = pair[0]
                .strip_prefix("return.")
                .filter(|e| pair[1].strip_prefix("normalized.") == Some(e))
                .ok_or_else(|| Error::Usage(format!("unexpected metrics columns {} / {}", pair[0], pair[1])))?;
            envs.push(env.to_string());
        }
        let mut rows: Vec<MetricsRow> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let num = |k: usize| -> Result<f64> {
                rec[k].parse().map_err(|_| Error::Usage(format!("line {line}: `{}` is not a number", &rec[k])))
            };
            let int = |k: usize| -> Result<u64> {
                rec[k].parse().map_err(|_| Error::Usage(format!("line {line}: `{}` is not an integer", &rec[k])))
            };
            let row = MetricsRow {
                env_step: int(0)?,
                learn_steps: int(1)?,
                batch_mean_loss: num(2)?,
                median_normalized: num(3)?,
                returns: (0..envs.len()).map(|e| num(FIXED.len() + 2 * e)).collect::<Result<_>>()?,
                normalized: (0..envs.len()).map(|e| num(FIXED.len() + 2 * e + 1)).collect::<Result<_>>()?,
            };
            if rows.last().is_some_and(|prev| prev.env_step >= row.env_step) {
                return Err(Error::Usage(format!("line {line}: env_step {} does not increase", row.env_step)));
            }
            rows.push(row);
        }
        Ok(Self { envs, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_csv(&bytes).map_err(|e| match e {
            Error::Usage(m) => Error::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Trapezoidal area under the median normalized curve divided by the
    /// step span: the curve's time-average.
    pub fn auc(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.env_step as f64, r.median_normalized)).collect();
        normalized_auc(&pts)
    }

    pub fn final_median(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.median_normalized)
    }
}

/// Trapezoidal integral of `(x, y)` points divided by `x_last − x_first`;
/// a single point yields its own `y`.
pub fn normalized_auc(points: &[(f64, f64)]) -> f64 {
    match points {
        [] => f64::NAN,
        [(_, y)] => *y,
        _ => {
            let area: f64 = points.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
            area / (points[points.len() - 1].0 - points[0].0)
        }
    }
}
