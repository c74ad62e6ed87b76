//! Per-cell statistics over trials.

use std::io::{Read, Write};

use super::run::RunOutcome;
use crate::error::{Error, Result};

pub const Z95: f64 = 1.959_963_984_540_054;
pub const Z99: f64 = 2.575_829_303_548_900_4;

/// A scalar summarising one run.
pub struct RunMetric {
    pub name: &'static str,
    pub extract: fn(&RunOutcome, u64) -> Option<f64>,
}

/// Metrics reported per cell. The second argument is the configured epoch count.
pub const RUN_METRICS: &[RunMetric] = &[
    RunMetric {
        name: "train_loss_global",
        extract: |o, _| o.final_record().map(|r| r.train_loss_global),
    },
    RunMetric {
        name: "train_loss_local_mean",
        extract: |o, _| o.final_record().map(|r| r.train_loss_local_mean),
    },
    RunMetric {
        name: "test_acc_avg",
        extract: |o, _| o.final_record().and_then(|r| r.test_acc_avg),
    },
    RunMetric {
        name: "test_acc_local_mean",
        extract: |o, _| o.final_record().and_then(|r| r.test_acc_local_mean),
    },
    RunMetric {
        name: "consensus_distance",
        extract: |o, _| o.final_record().and_then(|r| r.consensus_distance),
    },
    RunMetric {
        name: "consensus_distance_10pct",
        extract: |o, epochs| {
            o.record_at_fraction(0.1, epochs)
                .and_then(|r| r.consensus_distance)
        },
    },
    RunMetric {
        name: "grad_norm_sq",
        extract: |o, _| o.final_record().map(|r| r.grad_norm_sq),
    },
    RunMetric {
        name: "grad_norm_sq_avg",
        extract: |o, _| {
            (!o.records.is_empty()).then(|| {
                o.records.iter().map(|r| r.grad_norm_sq).sum::<f64>() / o.records.len() as f64
            })
        },
    },
    RunMetric {
        name: "cumulative_bytes",
        extract: |o, _| o.final_record().map(|r| r.cumulative_bytes as f64),
    },
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Normal-approximation half-widths.
    pub ci95: f64,
    pub ci99: f64,
    pub n: usize,
}

/// Mean and confidence half-widths `z · s / sqrt(n)` with the sample
/// standard deviation; a single value has zero width.
pub fn summarize(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let se = sd / n.sqrt();
    Some(Stat {
        mean,
        ci95: Z95 * se,
        ci99: Z99 * se,
        n: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub cell: usize,
    pub labels: Vec<(String, String)>,
    pub trials: usize,
    pub diverged: usize,
    /// One entry per [`RUN_METRICS`] item, over non-diverged runs.
    pub stats: Vec<Option<Stat>>,
}

impl AggregateRow {
    pub fn stat(&self, metric: &str) -> Option<Stat> {
        let idx = RUN_METRICS.iter().position(|m| m.name == metric)?;
        self.stats[idx]
    }
}

pub fn aggregate_cell(
    cell: usize,
    labels: Vec<(String, String)>,
    runs: &[RunOutcome],
    epochs: u64,
) -> AggregateRow {
    let ok: Vec<&RunOutcome> = runs.iter().filter(|r| !r.diverged()).collect();
    let stats = RUN_METRICS
        .iter()
        .map(|m| {
            let values: Vec<f64> = ok.iter().filter_map(|r| (m.extract)(r, epochs)).collect();
            summarize(&values)
        })
        .collect();
    AggregateRow {
        cell,
        labels,
        trials: runs.len(),
        diverged: runs.len() - ok.len(),
        stats,
    }
}

fn header(sweep_keys: &[String]) -> Vec<String> {
    let mut h = vec!["cell".to_string()];
    h.extend(sweep_keys.iter().cloned());
    h.extend(["trials", "diverged"].map(String::from));
    for m in RUN_METRICS {
        for suffix in ["mean", "ci95", "ci99"] {
            h.push(format!("{}_{suffix}", m.name));
        }
    }
    h
}

pub fn write_aggregate_csv<W: Write>(
    out: W,
    sweep_keys: &[String],
    rows: &[AggregateRow],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(sweep_keys))?;
    for row in rows {
        let mut rec = vec![row.cell.to_string()];
        rec.extend(row.labels.iter().map(|(_, v)| v.clone()));
        rec.push(row.trials.to_string());
        rec.push(row.diverged.to_string());
        for s in &row.stats {
            match s {
                Some(s) => rec.extend([s.mean, s.ci95, s.ci99].map(|v| v.to_string())),
                None => rec.extend(["NA"; 3].map(String::from)),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed aggregate CSV: header and string rows.
pub fn read_aggregate_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("cell") {
        return Err(Error::Config("not an aggregate CSV".into()));
    }
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(String::from).collect()))
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Renders the mean ± 95% half-width of every metric as an aligned table.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let fixed = header
        .iter()
        .position(|h| h == "diverged")
        .map_or(header.len(), |p| p + 1);
    let mut cols: Vec<String> = header[..fixed].to_vec();
    let metric_starts: Vec<usize> = (fixed..header.len()).step_by(3).collect();
    cols.extend(
        metric_starts
            .iter()
            .map(|&i| header[i].trim_end_matches("_mean").to_string()),
    );
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let mut out: Vec<String> = row[..fixed].to_vec();
            for &i in &metric_starts {
                out.push(match (row[i].parse::<f64>(), row[i + 1].parse::<f64>()) {
                    (Ok(m), Ok(c)) => format!("{m:.4e} ± {c:.1e}"),
                    _ => "NA".into(),
                });
            }
            out
        })
        .collect();
    let widths: Vec<usize> = (0..cols.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([cols[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&cols);
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        let se = (5.0f64 / 3.0).sqrt() / 2.0;
        assert!((s.ci95 - Z95 * se).abs() < 1e-15);
        assert!((s.ci99 - Z99 * se).abs() < 1e-15);
        let one = summarize(&[7.0]).unwrap();
        assert_eq!((one.mean, one.ci95), (7.0, 0.0));
        assert!(summarize(&[]).is_none());
    }
}
